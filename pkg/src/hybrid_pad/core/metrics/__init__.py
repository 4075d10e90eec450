"""Evaluation metrics: AUROC, pixel AUROC and AUPRO."""
