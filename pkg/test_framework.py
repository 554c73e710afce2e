# test_framework.py
# Acceptance harness: runs CLI cases end to end and scores their outputs

import os
import sys
import json
import logging
import argparse
import subprocess
from typing import Any, Dict, List

import numpy as np
import pandas as pd

from config_manager import configure_logging
from estimators import create_estimator
from flow_motion import binarize_gate, motion_mask
from media_io import read_csv, read_frames

logger = logging.getLogger("TestFramework")

CLI = os.path.join(os.path.dirname(os.path.abspath(__file__)), "cli.py")


class FusionAcceptanceTester:
    """Runs CLI acceptance cases and checks the files they leave behind"""

    def __init__(self, work_dir="./test_data/work"):
        self.work_dir = os.path.abspath(work_dir)
        os.makedirs(self.work_dir, exist_ok=True)

    def load_test_cases(self, test_file):
        """Load test cases from a JSON file

        Args:
            test_file: Path to the test cases JSON file

        Returns:
            List of test case dictionaries
        """
        try:
            with open(test_file, 'r') as f:
                test_cases = json.load(f)
            logger.info(f"Loaded {len(test_cases)} test cases from {test_file}")
            return test_cases
        except (OSError, json.JSONDecodeError) as e:
            logger.error(f"Error loading test cases: {str(e)}")
            return []

    def run_command(self, args: List[str], timeout: float) -> Dict[str, Any]:
        """Run one CLI invocation inside the work directory"""
        cmd = [sys.executable, CLI] + [a.replace("{work}", self.work_dir) for a in args]
        logger.info(f"Running: {' '.join(cmd)}")
        try:
            result = subprocess.run(cmd, capture_output=True, text=True, cwd=self.work_dir, timeout=timeout)
        except subprocess.TimeoutExpired:
            return {"returncode": None, "stdout": "", "stderr": f"timed out after {timeout:.0f}s"}
        return {"returncode": result.returncode, "stdout": result.stdout, "stderr": result.stderr}

    def _path(self, name: str) -> str:
        return os.path.join(self.work_dir, name.replace("{work}", self.work_dir))

    def _row_value(self, check: Dict[str, Any], row: str) -> float:
        table = read_csv(self._path(check["file"]))
        selected = table[table[check["key"]].astype(str) == row]
        if selected.empty:
            raise KeyError(f"no row {check['key']} = {row} in {check['file']}")
        return float(selected[check["column"]].iloc[0])

    def check_less_than(self, check):
        left, right = self._row_value(check, check["left"]), self._row_value(check, check["right"])
        strict = check.get("strict", True)
        passed = left < right if strict else left <= right
        return passed, f"{check['column']}({check['left']})={left:.6f} vs {check['column']}({check['right']})={right:.6f}"

    def check_value_range(self, check):
        value = self._row_value(check, check["row"])
        low, high = check.get("min", -np.inf), check.get("max", np.inf)
        return bool(low <= value <= high), f"{check['column']}({check['row']})={value:.6f} in [{low}, {high}]"

    def check_loss_decrease(self, check):
        curve = read_csv(self._path(check["file"]))
        window = check.get("window", 50)
        head, tail = curve["loss"].iloc[:window].mean(), curve["loss"].iloc[-window:].mean()
        return bool(tail < head), f"first {window} mean {head:.6f}, last {window} mean {tail:.6f}"

    def check_frame_count(self, check):
        frames = read_frames(self._path(check["dir"]))
        finite = bool(np.isfinite(frames).all() and frames.min() >= 0.0 and frames.max() <= 1.0)
        return len(frames) == check["count"] and finite, f"{len(frames)} frames, finite and in range: {finite}"

    def check_mask_iou(self, check):
        scene = self._path(check["scene"])
        vis = read_frames(os.path.join(scene, "vis"))
        truth = read_frames(os.path.join(scene, "mask")) > 0.5
        flows = create_estimator("estimate").run_pipeline(list(vis))
        gates = np.stack([binarize_gate(motion_mask(p, n), check.get("theta", 0.5)) > 0.5
                          for p, n in zip(flows["prev"], flows["next"])])
        # the last frame has no forward ground truth
        gates, truth = gates[:-1], truth[:-1]
        union = np.logical_or(gates, truth).sum()
        iou = float(np.logical_and(gates, truth).sum() / union) if union else 1.0
        return iou >= check.get("min", 0.8), f"mask IoU {iou:.4f}"

    def evaluate_result(self, test_case, result):
        """Evaluate a command result against the case expectations

        Args:
            test_case: The test case dictionary
            result: The run_command result dictionary

        Returns:
            Dict containing evaluation metrics
        """
        expected = test_case.get("expect_exit", 0)
        exit_ok = result["returncode"] == expected
        notes = [] if exit_ok else [f"exit {result['returncode']} != {expected}: {result['stderr'].strip()[-200:]}"]
        checks = test_case.get("checks", [])
        passed = 0
        if exit_ok:
            for check in checks:
                handler = getattr(self, f"check_{check['kind']}", None)
                if handler is None:
                    notes.append(f"unknown check kind '{check['kind']}'")
                    continue
                try:
                    ok, detail = handler(check)
                except (OSError, KeyError, ValueError) as e:
                    ok, detail = False, f"{check['kind']} could not run: {e}"
                passed += int(ok)
                notes.append(("✅ " if ok else "❌ ") + detail)
        check_rate = passed / len(checks) if checks else 1.0
        return {
            "name": test_case["name"],
            "success": exit_ok and check_rate == 1.0,
            "exit_code": result["returncode"],
            "expected_exit": expected,
            "checks": len(checks),
            "check_pass_rate": check_rate,
            "notes": " | ".join(notes),
        }

    def run_test_suite(self, test_file):
        """Run a full test suite

        Args:
            test_file: Path to the test cases JSON file

        Returns:
            DataFrame with test results
        """
        test_cases = self.load_test_cases(test_file)
        if not test_cases:
            logger.error(f"No test cases found in {test_file}")
            return None

        results = []
        for i, test_case in enumerate(test_cases):
            logger.info(f"Running test case {i+1}/{len(test_cases)}: {test_case['name']}")
            result = self.run_command(test_case["args"], test_case.get("timeout", 900))
            evaluation = self.evaluate_result(test_case, result)
            results.append(evaluation)
            if evaluation["success"]:
                logger.info(f"Test {i+1} passed")
            else:
                logger.error(f"Test {i+1} failed: {evaluation['notes']}")

        df = pd.DataFrame(results)
        logger.info(f"Test suite complete. Success rate: {df['success'].mean():.2f}")
        logger.info(f"Average check pass rate: {df['check_pass_rate'].mean():.2f}")
        return df

    def generate_test_cases(self, output_file, num_cases=10):
        """Write the standard acceptance cases

        Args:
            output_file: Path to save the generated test cases
            num_cases: Number of test cases to keep, in order

        Returns:
            List of generated test cases
        """
        small = ["--set", "channels=8", "--set", "patch=4", "--set", "crop=32", "--set", "batch=2"]
        test_cases = [
            {"name": "synth_default_scene", "args": ["synth", "--out", "scene"],
             "checks": [{"kind": "frame_count", "dir": "scene/ir", "count": 10},
                        {"kind": "mask_iou", "scene": "scene", "min": 0.8}]},
            {"name": "bench_scaling", "args": ["bench", "--out", "bench.csv"],
             "checks": [{"kind": "value_range", "file": "bench.csv", "key": "item", "column": "value",
                         "row": "attention_interaction:growth", "min": 3.0, "max": 3.0},
                        {"kind": "value_range", "file": "bench.csv", "key": "item", "column": "value",
                         "row": "total:growth", "max": 3.0}]},
            {"name": "train_loss_decreases",
             "args": ["train", "--data", "scene", "--out", "model.mavw", "--iters", "300", *small],
             "checks": [{"kind": "loss_decrease", "file": "model_loss.csv", "window": 50}]},
            {"name": "fuse_zero_flow", "args": ["fuse", "--ir", "scene/ir", "--vis", "scene/vis", "--out", "fused_zero",
                                                "--weights", "model.mavw", "--flow-mode", "zero", *small],
             "checks": [{"kind": "frame_count", "dir": "fused_zero", "count": 10}]},
            {"name": "fuse_random_flow", "args": ["fuse", "--ir", "scene/ir", "--vis", "scene/vis",
                                                  "--out", "fused_random", "--weights", "model.mavw",
                                                  "--flow-mode", "random", *small],
             "checks": [{"kind": "frame_count", "dir": "fused_random", "count": 10}]},
            {"name": "ablation_directionality",
             "args": ["ablate", "--data", "scene", "--out", "ablation.csv", "--variants", "full,no_mafm,full_sb",
                      "--iters", "2000", *small],
             "timeout": 1800,
             "checks": [{"kind": "less_than", "file": "ablation.csv", "key": "variant", "column": "ms2r_proxy",
                         "left": "full", "right": "no_mafm"},
                        {"kind": "less_than", "file": "ablation.csv", "key": "variant", "column": "ms2r_proxy",
                         "left": "full", "right": "full_sb"},
                        {"kind": "less_than", "file": "ablation.csv", "key": "variant", "column": "qabf_motion",
                         "left": "full_sb", "right": "full", "strict": False}]},
            {"name": "missing_input_is_io_error",
             "args": ["fuse", "--ir", "nowhere", "--vis", "scene/vis", "--out", "x"], "expect_exit": 2},
            {"name": "bad_config_is_usage_error",
             "args": ["bench", "--out", "b.csv", "--set", "tau=2"], "expect_exit": 1},
        ]
        test_cases = test_cases[:num_cases]

        try:
            os.makedirs(os.path.dirname(os.path.abspath(output_file)), exist_ok=True)
            with open(output_file, 'w') as f:
                json.dump(test_cases, f, indent=2)
            logger.info(f"Generated {len(test_cases)} test cases and saved to {output_file}")
        except OSError as e:
            logger.error(f"Error saving test cases: {str(e)}")

        return test_cases

    def save_results(self, results_df, output_file):
        """Save test results to a CSV file"""
        try:
            results_df.to_csv(output_file, index=False)
            logger.info(f"Results saved to {output_file}")
            return True
        except OSError as e:
            logger.error(f"Error saving results: {str(e)}")
            return False


def main():
    """Main function to run the acceptance harness"""
    parser = argparse.ArgumentParser(description="Video Fusion Acceptance Harness")
    parser.add_argument("--generate", action="store_true", help="Generate test cases")
    parser.add_argument("--run", action="store_true", help="Run test cases")
    parser.add_argument("--test-file", default="./test_data/test_cases.json", help="Path to test cases file")
    parser.add_argument("--results-file", default="./test_data/test_results.csv", help="Path to save test results")
    parser.add_argument("--num-cases", type=int, default=10, help="Number of test cases to generate")
    parser.add_argument("--work-dir", default="./test_data/work", help="Directory the cases run in")
    args = parser.parse_args()

    configure_logging(log_file="fusion_acceptance.log")
    tester = FusionAcceptanceTester(args.work_dir)

    if args.generate:
        tester.generate_test_cases(args.test_file, args.num_cases)

    if args.run:
        results = tester.run_test_suite(args.test_file)
        if results is not None:
            tester.save_results(results, args.results_file)
            print(results[["name", "success", "check_pass_rate"]].to_string(index=False))
            sys.exit(0 if results["success"].all() else 1)


if __name__ == "__main__":
    main()
