#!/usr/bin/env python3
"""
Mean-Field LQG Solver Entry Point
=================================

Forwards its arguments to the solver module so the tool can be run
from the project root without installing it.

Usage:
    python run.py check --config configs/ex22.json
    python run.py nash-gap --config configs/ex22.json --N-list 32,128
"""

import sys
import os
import subprocess

def main():
    """Run python -m src.main with this script's arguments"""

    if not os.path.exists('src/main.py'):
        print("❌ Error: 'src/main.py' not found!")
        print("💡 Make sure you're running this from the project root directory.")
        print("📁 Current directory:", os.getcwd())
        return 1

    try:
        # Exit codes are part of the interface, so pass them through unchanged
        result = subprocess.run([sys.executable, '-m', 'src.main', *sys.argv[1:]],
                                cwd=os.getcwd())
        return result.returncode
    except KeyboardInterrupt:
        print("\n👋 Interrupted by user")
        return 1
    except Exception as e:
        print(f"❌ Unexpected error: {e}")
        return 1

if __name__ == "__main__":
    sys.exit(main())
