with open("f.txt") as fh:
    data = fh.read()