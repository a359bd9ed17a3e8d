"""内置算例"""
