"""Selective fine-tuning lab."""
