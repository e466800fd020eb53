"""Feature-conditioned flow matching for protein conformational ensembles.

A sequence-independent sampler: trunk features are computed once per target
and a light denoiser is iterated on noisy coordinates. Submodules:

- ``geometry``: Kabsch superposition, dihedrals, torsion features, contacts
- ``prior``: harmonic chain prior
- ``features``: pair blocks, input embedder, feature providers
- ``denoiser``: oracle and toy denoisers, backbone reconstruction
- ``flow``: interpolation, vector fields, sampler, training
- ``metrics``: ensemble comparison suite
- ``io``: PDB, binary feature/parameter files, config, reports
- ``bench``: runtime benchmark and power-law fits
- ``cli``: the ``featflow`` command
"""

__version__ = "0.1.0"
