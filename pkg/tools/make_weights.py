"""Regenerate the frozen feature-extractor weight file from its fixed seed."""
from metarender.features import DEFAULT_WEIGHTS, generate_weights, write_weights

if __name__ == "__main__":
    write_weights(DEFAULT_WEIGHTS, generate_weights())
    print(DEFAULT_WEIGHTS)
