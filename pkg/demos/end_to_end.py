"""Run the whole pipeline on a small procedural dataset and print the tables.

    python demos/end_to_end.py [demos/small_run.json]

Equivalent to ``kexp run --config demos/small_run.json`` followed by
``kexp report runs/small``; kept as a script to show the library calls.
"""

import sys
from pathlib import Path

from knowledge_exposure.evaluation import read_report, render_text
from knowledge_exposure.pipeline import load_config, run_pipeline, validate_config


def main(path):
    config = load_config(path)
    problems = validate_config(config)
    if problems:
        for p in problems:
            print(f"config error: {p}")
        return 1
    run_dir = run_pipeline(config)
    for report in read_report(run_dir / "report.json"):
        print(render_text(report))
        print()
    print(f"artifacts in {run_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).with_name("small_run.json")))
