import os
import subprocess
import sys
import unittest

ROOT = os.path.join(os.path.dirname(__file__), "..")


class TestArchitectureGuard(unittest.TestCase):
    def test_guard_passes(self):
        proc = subprocess.run(
            [sys.executable, os.path.join(ROOT, "scripts", "architecture_guard.py")],
            capture_output=True,
            text=True,
            check=False,
        )
        self.assertEqual(proc.returncode, 0, proc.stdout)
        self.assertIn("ARCH GUARD: PASS", proc.stdout)


if __name__ == "__main__":
    unittest.main()
