"""Desk-scale harness: synthetic corpus generator, benchmark, HTTP service, CLI."""
