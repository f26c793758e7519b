"""Learned IK against energy-minimization baselines on an 8-joint chain.

Prints one report row per method in the same CSV layout as ``deepfeedback bench``.
"""
from deepfeedback.bench import BenchConfig, run_bench
from deepfeedback.tasks import IKTask, generate_dataset
from deepfeedback.training import StagePlan, train_stagewise


def main():
    task = IKTask(n_joints=8, seed=0)
    ds = generate_dataset(task, 1000, seed=0)
    nets, _ = train_stagewise(task, ds, StagePlan(stages=3, epochs=30))
    cfg = BenchConfig(max_iter=200)
    header = None
    for mode in ("regression", "feedback", "feedback+damping", "adam", "lbfgs"):
        report, _ = run_bench(task, ds, mode, nets, cfg)
        if header is None:
            header = ",".join(report.header())
            print(header)
        print(",".join(report.row()))


if __name__ == "__main__":
    main()
