"""Unit and integration tests for codecomposer."""
