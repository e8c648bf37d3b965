"""Finite element operator networks with basis-support sparsity.

Subpackages: mesh generation and dof maps (`mesh`), P1 assembly and solvers
(`fem`), basis-support graphs and layer patterns (`sparsity`), masked MLPs
(`network`), residual training (`training`), constructive linear-map
realizations (`uat`), perturbation analysis (`stability`), experiment
drivers (`experiments`), and the `femnet` CLI (`cli`).
"""

__version__ = "0.1.0"
