namespace berg {}
