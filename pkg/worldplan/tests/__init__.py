"""Test suite for worldplan."""
