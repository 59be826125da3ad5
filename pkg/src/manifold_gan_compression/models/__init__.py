"""
Generator, discriminator and encoder networks with their training loops.
"""
