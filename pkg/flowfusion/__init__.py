"""FlowFusion: dynamic-aware RGB-D visual odometry with optical-flow residual segmentation."""

__version__ = "0.1.0"
