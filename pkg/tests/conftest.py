import sys
from pathlib import Path

# Make the naive-oracle helpers importable from any test module.
sys.path.insert(0, str(Path(__file__).parent))
