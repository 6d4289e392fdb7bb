import hypothesis

hypothesis.settings.register_profile(
    "ci",
    max_examples=40,
    derandomize=True,
    deadline=None,
    print_blob=False,
)
hypothesis.settings.load_profile("ci")
