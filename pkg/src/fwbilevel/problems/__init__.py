from .toy import ToyQuadraticBilevel, default_toy, toy_analytic_hypergradient
from .ssl import (
    LabelPropagationContext,
    MultilayerSSLInstance,
    aggregate_layers,
    generate_sbm_multilayer,
    label_propagation_lower_level,
    power_iteration_opnorm,
    ssl_fixed_point_problem,
    ssl_upper_loss,
)
from .distill import (
    DistillationInstance,
    blog_surrogate,
    distillation_problem,
    load_csv_dataset,
    response_to_classes,
    synthetic_blobs,
    top_b_selection,
)
