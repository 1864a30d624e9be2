from fedminmax.cli import main

main()
