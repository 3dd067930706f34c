"""Conductivity reconstruction from undersampled EIT measurements.

Library layout:

- ``mesh``: disk meshes, electrodes, weighted vertex adjacency
- ``forward``: complete-electrode-model FEM, forward map, Jacobian
- ``protocol``: injection/measurement patterns, noise, feature weights
- ``prox``: proximal and projection operators
- ``masks``: support masks, the FN metric, mask files
- ``phantoms``: phantom sampling, image metrics, dataset files
- ``solver``: the proximal-gradient iteration and its reports
- ``experiments``: variant comparison, rate study, measurement sweeps
- ``cli``: the ``eit-cs`` command-line entry point
"""

__version__ = "0.1.0"
