"""
From spectra to filtered RGB
============================

Each subview of the light-field camera sees the scene through one broadband
filter and the same RGB sensor.  This script builds the default filter bank,
prints how much light each filter passes and shows how one emitted spectrum
turns into nine different RGB triples.
"""

import numpy as np

from bsnerf.spectral import WavelengthGrid, build_response, default_filters, default_sensor, project, unfiltered_response

grid = WavelengthGrid()
print(f"{grid.bins} bins of {grid.delta:g} nm from {grid.lambda_min:g} to {grid.lambda_max:g} nm")

filters = default_filters(grid)
sensor = default_sensor(grid)
for f in filters:
    print(f"  {f.name:<11s} mean transmission {f.values.mean():.3f}")

# The response matrix folds filter, sensor and bin width together:
# weights[d, k, b] = filter_d(b) * sensor_k(b) * delta
M = build_response(filters, sensor)
print("response weights:", M.weights.shape)

# A greenish emission spectrum
spectrum = 0.1 + 0.8 * np.exp(-0.5 * ((grid.centers - 540.0) / 25.0) ** 2)
for d, f in enumerate(filters):
    print(f"  through {f.name:<11s} -> RGB {np.round(project(spectrum, M.weights[d]), 2)}")

# Without any filter the sensor alone sees more light than through any filter
bare = project(spectrum, unfiltered_response(sensor))
print("bare sensor    -> RGB", np.round(bare, 2))
