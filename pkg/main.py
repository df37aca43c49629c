#!/usr/bin/env python3
"""
FedLAW Simulator - Byzantine-robust federated learning
محاكي التعلم الموحد المقاوم للعملاء الخبيثين
Main entry point: python main.py run --config config.ini
"""

import sys

from cli import main

if __name__ == "__main__":
    sys.exit(main())
