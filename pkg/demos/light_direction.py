"""Directional light recovery: per-stage error curve on a small shaded set."""
from deepfeedback.bench import run_bench
from deepfeedback.tasks import LightTask, generate_dataset
from deepfeedback.training import StagePlan, train_stagewise


def main():
    task = LightTask("directional", resolution=32)
    ds = generate_dataset(task, 400, seed=0)
    nets, _ = train_stagewise(task, ds, StagePlan(stages=4, epochs=15))
    report, _ = run_bench(task, ds, "feedback", nets)
    print(report.stages_csv(), end="")


if __name__ == "__main__":
    main()
