"""异常、估计值与并行工具"""
