# Environment settings and per-command run configuration
