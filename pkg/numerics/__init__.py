# Numerics package