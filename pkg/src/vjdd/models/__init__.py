"""Network modules of vjdd."""
