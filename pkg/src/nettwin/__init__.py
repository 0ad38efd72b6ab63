"""nettwin: a desk-scale learnable digital twin for packet-network KPIs.

Modules:
    nettopo    wired and wireless topology builders, flow sampling
    routing    seeded shortest-path routing and an exhaustive oracle
    simulator  event-driven on/off traffic simulator producing per-flow KPIs
    autodiff   reverse-mode tape over dense float64 tensors, Adam
    twin       graph-learning KPI predictors (glance, routenet, gnn)
    pipeline   dataset generation, preprocessing, training, evaluation
    manage     gradient and hill-climbing network management on a frozen twin
    cli        command-line entry points
"""

__version__ = "0.1.0"
