"""Integration tests for codecomposer (train real models; marked slow)."""
