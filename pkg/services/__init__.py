"""算例注册、实验调度、结果目录与用户设置"""
