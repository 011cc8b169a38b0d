"""Core module of vjdd: data, degradation, motion, metrics and losses."""
