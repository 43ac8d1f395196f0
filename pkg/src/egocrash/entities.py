"""Entity classes of the synthetic accident world and their render colours."""

ENTITY_CLASSES = ("pedestrian", "cyclist", "motorbike", "car", "truck")

# RGB in [0, 1]; chosen far apart from each other and from road/sky/landmark tones
ENTITY_COLORS = {
    "pedestrian": (0.95, 0.10, 0.10),
    "cyclist": (0.10, 0.90, 0.15),
    "motorbike": (0.90, 0.10, 0.90),
    "car": (0.10, 0.25, 0.95),
    "truck": (0.95, 0.85, 0.10),
}
