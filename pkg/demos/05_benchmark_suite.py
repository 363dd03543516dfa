"""Benchmark machinery: synthetic suite, noisy oracle, sweep, ablations.

Generates a small procedural tabletop suite, runs it with a noisy
oracle at every iteration cap from 1 to 5 (the more iterations the loop
gets, the more proposals it can repair), and shows the four ablation
switches on the same fixture.
"""

import dataclasses
from pathlib import Path

from poseloop import LoopConfig
from poseloop.harness import (
    generate_synthetic_suite,
    oracle_backend_factory,
    run_suite,
    run_sweep,
)

out_dir = Path(__file__).parent / "out" / "05_suite"
suite = generate_synthetic_suite(24, seed=11, out_dir=out_dir)
print(f"generated 24 tasks under {out_dir}")

config = LoopConfig(image_width=160, image_height=120)
noisy = dict(noise_prob=0.3, seed=5)

print("\n--- max-iteration sweep (noisy oracle, noise_prob=0.3) ---")
aggregates = run_sweep(suite, oracle_backend_factory(**noisy), config,
                       out_dir=out_dir / "sweep", caps=range(1, 6))
for aggregate in aggregates:
    cap = aggregate["max_iterations"]
    rate = aggregate["overall_success_rate"]
    print(f"  max_iterations={cap}: success {rate:.3f}")

print("\n--- ablations (same noisy fixture, cap 5) ---")
baseline = aggregates[-1]["overall_success_rate"]
print(f"  full configuration : {baseline:.3f}")
for name in ("no_memory", "single_view", "euler_rotation", "no_coord_vis"):
    ablated = dataclasses.replace(config, **{name: True})
    aggregate = run_suite(suite, oracle_backend_factory(**noisy), ablated)
    marker = "<=" if aggregate["overall_success_rate"] <= baseline else ">"
    print(f"  {name:<19}: {aggregate['overall_success_rate']:.3f} ({marker} full)")

print("\n(the geometric oracle ignores images and memory, so its ablation "
      "scores merely bound the full configuration from below; the paper's "
      "directional gaps need a real VLM)")
print(f"reports under {out_dir / 'sweep'}")
