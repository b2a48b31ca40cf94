"""Corpus curation and training-data construction for legal-domain LLM
adaptation: cleaning, perplexity filtering, near-deduplication, packing,
mixture sampling, instruction/preference dataset construction, and a
legal-benchmark scoring harness."""

__version__ = "0.1.0"
