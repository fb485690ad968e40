df["col"] = df["a"] + df["b"]
first, *rest = items