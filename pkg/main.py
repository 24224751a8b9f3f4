"""
Main Application Entry Point
Runs the token variance toolkit command line
"""

import os
import sys

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

from src.cli import main

if __name__ == '__main__':
    sys.exit(main())
