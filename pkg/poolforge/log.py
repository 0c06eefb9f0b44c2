# poolforge/log.py

import logging

_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# provider SDKs log every request at INFO
_NOISY = ("httpx", "urllib3", "google", "llama_index", "sentence_transformers")


def get_logger(name: str) -> logging.Logger:
    return logging.getLogger(name)


def configure_logging(verbose: bool = False) -> None:
    """Install the root handler once; called by the CLI entry point."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=_FORMAT,
    )
    for name in _NOISY:
        logging.getLogger(name).setLevel(logging.WARNING)
