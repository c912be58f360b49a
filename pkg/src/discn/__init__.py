"""Dual-stream depth-aware saliency network for gaze-based group classification."""
