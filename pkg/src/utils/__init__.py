# Utilities package: logging, settings, config, timing
