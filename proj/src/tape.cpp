// implementation for tape
