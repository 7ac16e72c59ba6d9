#!/usr/bin/env python3
"""
Acceptance runner: every command at full sample size on the shipped presets
Called by run_acceptance.sh; exits 1 when any stage fails
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import filecmp
from datetime import datetime
from pathlib import Path

from cnnldp.experiments import PRESETS, preset, run
from cnnldp.settings import get_settings, setup_logging


def run_stage(stage_name, stage_function):
    """Run one stage and return its outcome"""
    print(f"\n{'='*70}")
    print(f"🔄 Running {stage_name}...")
    print(f"{'='*70}")

    try:
        start_time = datetime.now()
        passed = stage_function()
        elapsed = (datetime.now() - start_time).total_seconds()

        if passed:
            print(f"✅ {stage_name} passed in {elapsed:.1f}s")
        else:
            print(f"⚠️  {stage_name} failed after {elapsed:.1f}s")
        return {"success": passed, "time": elapsed}

    except Exception as e:
        print(f"❌ {stage_name} crashed: {e}")
        import traceback
        traceback.print_exc()
        return {"success": False, "time": 0, "error": str(e)}


def command_stage(root, command, names, workers=None):
    def stage():
        statuses = []
        for name in names:
            outcome = run(command, preset(name), out=root / name / command, workers=workers)
            print(f"  {name}: status {outcome.status}")
            statuses.append(outcome.status)
        return all(s == 0 for s in statuses)
    return stage


def reproducibility_stage(root):
    def stage():
        identical = True
        for name in PRESETS:
            dirs = []
            for workers in (1, 4):
                out = root / name / f"chain-sim-w{workers}"
                if run("chain-sim", preset(name), out=out, workers=workers).status != 0:
                    return False
                dirs.append(out)
            _, mismatch, errors = filecmp.cmpfiles(dirs[0], dirs[1], ["chain.json", "chain.csv"], shallow=False)
            if mismatch or errors:
                print(f"  {name}: differs in {mismatch + errors}")
                identical = False
            else:
                print(f"  {name}: byte-identical at workers 1 and 4")
        return identical
    return stage


def main():
    """Run all acceptance stages in sequence"""
    setup_logging()
    settings = get_settings()
    root = Path(settings.output_root or "runs") / f"acceptance_{datetime.now():%Y-%m-%d_%H%M%S}"

    print("\n" + "="*70)
    print("🚀 ACCEPTANCE SUITE - ALL PRESETS")
    print("="*70)
    print(f"\nStart time: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
    print(f"Artifacts: {root}")
    print("="*70 + "\n")

    everything = list(PRESETS)
    stages = [
        ("Architecture validation", command_stage(root, "validate", everything)),
        ("Layer rates and MGF convexity", command_stage(root, "rate", everything)),
        ("Empirical LDP", command_stage(root, "ldp-verify", everything)),
        ("Limit kernels", command_stage(root, "limit", everything)),
        ("LLN scaling and Gaussian limit", command_stage(root, "clt-check", everything)),
        ("Rate zero at the limit chain", command_stage(root, "rate-chain", everything)),
        ("Posterior potential and laziness", command_stage(root, "posterior", everything)),
        ("Reproducibility across workers", reproducibility_stage(root)),
    ]
    results = {name: run_stage(name, fn) for name, fn in stages}

    print("\n" + "="*70)
    print("📊 ACCEPTANCE SUMMARY")
    print("="*70)

    total_time = sum(r.get('time', 0) for r in results.values())
    successful = sum(1 for r in results.values() if r.get('success', False))

    print(f"\nTotal time: {total_time:.1f} seconds")
    print(f"Passed stages: {successful}/{len(results)}")
    print(f"\nBreakdown:")
    for name, result in results.items():
        status = "✅" if result.get('success') else "❌"
        print(f"  {status} {name}: {result.get('time', 0):.1f}s")

    print("\n" + "="*70)
    print(f"✅ Acceptance run completed at {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
    print("="*70 + "\n")

    return results


if __name__ == "__main__":
    results = main()

    if all(r.get('success', False) for r in results.values()):
        sys.exit(0)
    else:
        sys.exit(1)
