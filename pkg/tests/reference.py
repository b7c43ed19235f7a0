"""Published reference values used as expected results."""

# (layer, operator shape, output shape) for the default network
TABLE1 = [
    ("Input", None, (3, 77, 77)),
    ("Lifting Convolution", (16, 3, 4, 4), (8, 16, 74, 74)),
    ("Max Pooling", (2, 2), (8, 16, 37, 37)),
    ("SE(2,8)-Convolution", (8, 16, 16, 4, 4), (8, 16, 34, 34)),
    ("Max Pooling", (2, 2), (8, 16, 17, 17)),
    ("SE(2,8)-Convolution", (8, 16, 16, 4, 4), (8, 16, 14, 14)),
    ("Max Pooling", (2, 2), (8, 16, 7, 7)),
    ("SE(2,8)-Convolution", (8, 16, 16, 4, 4), (8, 16, 4, 4)),
    ("SE(2,8)-Convolution", (8, 32, 16, 4, 4), (8, 32, 1, 1)),
    ("Maximum Projection", None, (32,)),
    ("Fully Connected", (64, 32), (64,)),
    ("Fully Connected + Sigmoid", (1, 64), (1,)),
]

# augmentation table: transform -> (probability, low, high)
TABLE2 = {
    "transposition": (0.5, None, None),
    "color_shift": (0.5, -13, 13),
    "gamma": (0.5, 0.9, 1.5),
    "hue": (0.5, 0.0, 1.0),
    "shift": (1.0, -12, 12),
    "scale": (0.5, -0.13, 0.13),
    "noise": (0.5, None, None),
    "cutout": (0.5, 8, 16),
}
