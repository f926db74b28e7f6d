"""Global class table for the synthetic two-domain benchmark.

All label maps, palettes, frequency vectors and embedding files are ordered
by this table. 255 is reserved for pixels excluded from every loss and
metric.
"""

CLASS_NAMES = ("road", "sidewalk", "sky", "building", "bike", "motorbike")
NUM_CLASSES = len(CLASS_NAMES)
IGNORE_ID = 255

# Fallback names tried when an embedding file lacks the canonical name.
# Kept deliberately small; synonym expansion beyond this buys little.
CLASS_ALIASES = {
    "bike": ("bicycle",),
    "motorbike": ("motorcycle", "motor"),
    "sidewalk": ("pavement",),
}
