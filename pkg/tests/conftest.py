import os

# Bitwise comparisons below assume sequential per-sample execution.
os.environ["TCC_LAB_THREADS"] = "0"
