"""Multi-cue 2D graph SLAM with config-driven pipelines."""
