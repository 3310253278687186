"""Semi-supervised domain generalization engine (CAT)."""
