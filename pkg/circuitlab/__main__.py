from circuitlab.main import main

main()
