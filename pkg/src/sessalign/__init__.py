"""Adversarial session-invariant CTC decoding."""
