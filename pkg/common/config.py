"""Project runtime constants (logging and output layout)."""

# Runtime
LOG_LEVEL = "INFO"
LOG_FORMAT = "%(asctime)s - %(filename)s:%(lineno)d - %(levelname)s - %(message)s"

# Output layout under --out
LOG_SUBDIR = "logs"
EFFECTIVE_CONFIG_FILE = "effective_config.env"
SUMMARY_FILE = "summary.json"
NAN_DUMP_FILE = "nan_batch.npz"
