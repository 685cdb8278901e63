"""Figures from exported run directories; see the scripts in this package."""
