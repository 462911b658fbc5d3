"""Joint adversarial domain adaptation with privileged depth, on toy street scenes."""
