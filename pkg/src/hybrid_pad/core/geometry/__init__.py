"""Rigid transforms and pinhole projection."""
