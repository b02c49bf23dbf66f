#!/usr/bin/env python3
"""
Laplace-LoRA - Entry point for running as module

Usage:
    python -m laplace_lora
"""

import sys
from laplace_lora.cli import main

if __name__ == "__main__":
    sys.exit(main())
