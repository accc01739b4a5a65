import sys
import unittest
from pathlib import Path

# Insert pythonpath into the front of the PATH environment variable, before importing anything from project/
pythonpath = str(Path(__file__).parent.parent)
try:
    sys.path.index(pythonpath)
except ValueError:
    sys.path.insert(0, pythonpath)

# Run all tests in the /test folder, not just one test_*.py file.
# Plain pytest classes are only collected by pytest (scripts/pytest_run_all.sh)
loader = unittest.TestLoader()
start_dir = str(Path(__file__).parent)
suite = loader.discover(start_dir, top_level_dir=pythonpath)

runner = unittest.TextTestRunner(verbosity=2)
result = runner.run(suite)
sys.exit(0 if result.wasSuccessful() else 1)
