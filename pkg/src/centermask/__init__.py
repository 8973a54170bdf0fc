"""Single-shot instance segmentation from centre points: local shape times global saliency."""
