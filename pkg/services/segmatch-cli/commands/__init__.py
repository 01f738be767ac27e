from . import close_loops, evaluate, localize, make_synthetic, segment, train

# registration order is the order shown by --help
COMMANDS = (train, localize, close_loops, segment, evaluate, make_synthetic)
