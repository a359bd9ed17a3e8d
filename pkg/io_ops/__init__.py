"""配置、实验记录与策略文件的读写"""
