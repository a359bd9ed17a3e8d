"""代价估计"""
