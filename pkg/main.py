#!/usr/bin/env python3
"""
crossgap entry point

Wraps the crossgap command line so a checkout can be run without installing:

    ./main.py simulate --preset car-train --out runs/train
    ./main.py train --input runs/train/frames --out model.json
    ./main.py detect --input runs/test/frames --model model.json --events events.csv
"""
import sys

from crossgap.__main__ import main

if __name__ == "__main__":
    sys.exit(main())
