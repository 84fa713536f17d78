"""Energies and attention weights of the parameter-free prior attention on a toy channel."""

import numpy as np

from floodbench.attention import EnergyConfig, attention_weights, simam_energy

channel = np.array([
    [0.1, 0.1, 0.1, 0.1],
    [0.1, 0.9, 0.1, 0.1],
    [0.1, 0.1, 0.1, 0.1],
])

print("energy per neuron (lower = more distinct):")
for i in range(channel.shape[0]):
    print("  " + "  ".join(f"{simam_energy(channel, (i, j)):.3f}" for j in range(channel.shape[1])))

w = attention_weights(channel[None, None], EnergyConfig(1e-4))[0, 0]
print("weights sigmoid(1/e):")
for row in w:
    print("  " + "  ".join(f"{v:.3f}" for v in row))

flat = attention_weights(np.full((1, 1, 3, 4), 0.5))[0, 0]
print(f"constant channel: every weight = {flat[0, 0]:.6f} (sigmoid(0.5) = {1 / (1 + np.exp(-0.5)):.6f})")
