"""Control-based continuation of pendulum rotations with projected time-delayed feedback."""
