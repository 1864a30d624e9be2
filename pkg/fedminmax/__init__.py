"""fedminmax: minimax group-fair federated learning simulator."""
