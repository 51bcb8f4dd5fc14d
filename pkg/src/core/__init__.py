# Numerical engine: Riccati, conditions, consistency, strategy, simulation
