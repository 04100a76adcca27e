"""pseudoscope: measure what an LLM-agent adversary can infer from a pseudonymous activity archive."""

__version__ = "0.1.0"
