"""Knowledge-replay fine-tuning lab for a miniature image captioner."""

__version__ = "0.1.0"
