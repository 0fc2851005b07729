"""kmtq - strong couplings for RS(G,p)/G/1 transitory queues."""
