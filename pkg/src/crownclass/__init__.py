"""Conifer/deciduous classification of airborne LiDAR tree crowns.

Batch pipeline: point/stem ingestion, intensity normalization,
crown-stem registration, crown rasterization, small CNN ensembles with
iterative mislabel correction, and the evaluation sweeps around them.
"""

__version__ = "0.1.0"

CONIFER = "conifer"
DECIDUOUS = "deciduous"
SPECIES_CLASSES = (CONIFER, DECIDUOUS)

# Class index convention used by every network and result table.
CLASS_INDEX = {CONIFER: 0, DECIDUOUS: 1}
INDEX_CLASS = {index: name for name, index in CLASS_INDEX.items()}
