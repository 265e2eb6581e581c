"""In-context knowledge-graph reasoning with prompt graphs and a unified tokenizer."""
__version__ = "0.1.0"
