"""Tests for the remseq package."""
