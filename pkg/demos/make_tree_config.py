"""Generate the tree-backend demo configuration.

The running state weight is a function of the Brownian level,

    Q(t) = 1 + 0.5 * tanh(W_t),

which stays at least 0.5 at every lattice node, so the definiteness
assumptions hold pathwise.  Tree-adapted coefficients are spelled out
node by node in the config ("level,ups" keys); this script writes them
for the chosen depth so the YAML stays reproducible.

Run:  python demos/make_tree_config.py [depth]
"""

import sys
from pathlib import Path

import numpy as np

DEPTH = int(sys.argv[1]) if len(sys.argv) > 1 else 8
T = 1.0


def q_entry(t: float, w: float) -> float:
    return 1.0 + 0.5 * np.tanh(w)


def main() -> None:
    dt = T / DEPTH
    lines = [
        "# Tree-backend case: state weight driven by the Brownian level,",
        "# Q(t) = 1 + 0.5*tanh(W_t) >= 0.5 at every node.",
        f"# Generated by demos/make_tree_config.py {DEPTH}",
        "problem:",
        "  n: 1",
        "  m: 1",
        "  ell: 2",
        f"  T: {T}",
        "  delta: 0.5",
        "  generator: [[-1.0, 1.0], [1.0, -1.0]]",
        "  x0: [1.0]",
        "  i0: 1",
        "  A: [[0.0]]",
        "  B: [[1.0]]",
        "  C: [[0.0]]",
        "  D: [[0.0]]",
        "  Q:",
        "    tree_table:",
    ]
    for k in range(DEPTH + 1):
        for j in range(k + 1):
            w = (2 * j - k) * np.sqrt(dt)
            lines.append(f'      "{k},{j}": [[{q_entry(k * dt, w):.17g}]]')
    lines += [
        "  S: [[0.0]]",
        "  R: [[1.0]]",
        "  G: [[1.0]]",
        "solver:",
        "  backend: tree",
        f"  tree_depth: {DEPTH}",
        "output:",
        "  solution_path: tree_solution.csv",
        "  report_path: tree_report.txt",
    ]
    out = Path(__file__).parent / "configs" / "tree_random_q.yaml"
    out.write_text("\n".join(lines) + "\n")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
