"""
Architecture specs, manifold index, pruning agents, objectives and the pruning loop.
"""
