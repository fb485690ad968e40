def scale(x, factor=2.0):
    result = x * factor
    return result