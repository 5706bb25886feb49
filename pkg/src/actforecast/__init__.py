"""Action forecasting from precomputed video features."""
