"""Tests for toploc-search.

Note: This code was generated with assistance from AI coding tools
and has been reviewed and tested by a human.
"""
