"""数值核心: 扩散模拟、策略、似然权重、信息结构与离散求解"""
