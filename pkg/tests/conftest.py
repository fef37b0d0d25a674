import sys
from pathlib import Path

# Let test modules import the shared oracle helpers as a plain module.
sys.path.insert(0, str(Path(__file__).parent))
