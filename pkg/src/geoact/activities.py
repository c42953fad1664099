"""The nine parent activities. Order is alphabetical and doubles as class index."""

ACTIVITIES: tuple[str, ...] = (
    "Arts & Entertainment",
    "College & University",
    "Food",
    "Nightlife Spot",
    "Outdoors & Recreation",
    "Professional & Other Places",
    "Residence",
    "Shop & Service",
    "Travel & Transport",
)
N_CLASSES = len(ACTIVITIES)
ACTIVITY_INDEX: dict[str, int] = {name: i for i, name in enumerate(ACTIVITIES)}
