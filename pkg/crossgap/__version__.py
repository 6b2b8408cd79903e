"""Version for crossgap."""
VERSION = "0.3.0"
MIN_PY_VERSION = "3.9"

if __name__ == "__main__":
    print(VERSION)
