#!/usr/bin/env python3
"""
Architecture guard: checks package invariants before merging.

Runs fast, no network and no torch import required.

Checks:
- Required modules exist under src/sitta/
- Public operations are defined in their modules
- JSON schemas are shipped with the package
- Library modules never configure logging handlers (only cli.py does)
- Tests import from sitta, not src.sitta
- pyproject.toml carries no web framework dependency
"""
from __future__ import annotations

import re
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
PKG = ROOT / "src" / "sitta"

REQUIRED_SYMBOLS: dict[str, list[str]] = {
    "core.py": [
        r"class\s+ModelAdapter\b",
        r"def\s+snapshot_weights\(",
        r"def\s+restore_weights\(",
        r"def\s+select_params\(",
        r"def\s+weights_hash\(",
    ],
    "corruptions.py": [r"def\s+apply_corruption\(", r"def\s+diamond_square\(", r"def\s+derive_corrupted_dataset\("],
    "metrics.py": [r"def\s+confusion_counts\(", r"def\s+miou\(", r"def\s+miou_c\(", r"def\s+miou_i\(", r"def\s+error_reduction\("],
    "losses.py": [r"def\s+soft_iou_loss\(", r"def\s+ce_loss\(", r"def\s+entropy_loss\(", r"def\s+reverse_kl\("],
    "attacks.py": [r"def\s+fgsm_step\(", r"def\s+pgd_attack\("],
    "auxnets.py": [r"def\s+gen_refiner_pairs\(", r"def\s+train_refiner\(", r"def\s+train_diou\(", r"def\s+predict_iou_loss\("],
    "tta.py": [r"def\s+compute_objective\(", r"def\s+adapt_single_image\("],
    "harness.py": [
        r"def\s+grid_search\(",
        r"def\s+select_hparams\(",
        r"def\s+oracle_select\(",
        r"def\s+entropy_improvement_fit\(",
        r"def\s+aggregate_report\(",
    ],
    "report.py": [r"def\s+write_report\("],
    "config.py": [r"class\s+ExperimentConfig\b", r"def\s+load_config\("],
    "storage.py": [r"def\s+read_jsonl\(", r"def\s+append_jsonl\("],
    "cli.py": [r"def\s+main\(", r"def\s+configure_logging\("],
    "testbed.py": [r"def\s+make_shapes_dataset\(", r"def\s+train_toy_segmenter\("],
}
SCHEMAS = ["corpus_entry.json", "dataset_entry.json", "result_row.json", "trajectory_step.json"]
WEB_FRAMEWORKS = r"\b(flask|fastapi|uvicorn|django)\b"


def read_text(path: Path) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except FileNotFoundError:
        return ""


def fail(msg: str) -> None:
    print(f"ARCH GUARD: FAIL: {msg}")
    sys.exit(1)


def warn(msg: str) -> None:
    print(f"ARCH GUARD: WARN: {msg}")


def check_modules_and_symbols() -> None:
    for module, patterns in REQUIRED_SYMBOLS.items():
        txt = read_text(PKG / module)
        if not txt:
            fail(f"Missing {PKG / module}")
        for pat in patterns:
            if re.search(pat, txt) is None:
                fail(f"Missing symbol matching {pat} in {module}")


def check_schemas() -> None:
    for name in SCHEMAS:
        if not (PKG / "schema" / name).is_file():
            fail(f"Missing schema {name}")


def check_logging_configuration() -> None:
    for path in sorted(PKG.glob("*.py")):
        if path.name == "cli.py":
            continue
        if re.search(r"logging\.basicConfig\(|addHandler\(", read_text(path)):
            fail(f"Library module configures logging handlers: {path.name}")


def check_tests() -> None:
    tests = sorted((ROOT / "tests").glob("test_*.py"))
    if not tests:
        fail("No tests found")
    for tf in tests:
        txt = read_text(tf)
        if re.search(r"\bsrc\.sitta\b", txt):
            fail(f"Tests must import from 'sitta', not 'src.sitta': {tf.name}")


def check_pyproject() -> None:
    txt = read_text(ROOT / "pyproject.toml")
    if not txt:
        warn("pyproject.toml not found; skipping dependency checks")
        return
    if re.search(WEB_FRAMEWORKS, txt, flags=re.IGNORECASE):
        fail("pyproject.toml must not include web framework dependencies")


def main() -> None:
    check_modules_and_symbols()
    check_schemas()
    check_logging_configuration()
    check_tests()
    check_pyproject()
    print("ARCH GUARD: PASS")


if __name__ == "__main__":
    main()
