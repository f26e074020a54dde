"""
LangGraph node implementations for the dxs benchmark pipeline.

Provides node functions for:
- Dataset generation and reference separation
- Cross-validated training and evaluation per echo configuration
- Comparison and error reports
"""

from dxs_graph.nodes.data import (
    dataset_node,
    reference_node,
)

from dxs_graph.nodes.training import (
    config_label,
    evaluation_node,
    training_node,
)

from dxs_graph.nodes.report import (
    error_report_node,
    report_node,
)

__all__ = [
    # Data
    "dataset_node",
    "reference_node",
    # Training
    "training_node",
    "evaluation_node",
    "config_label",
    # Report
    "report_node",
    "error_report_node",
]
